use std::collections::BTreeSet;

use super::SandboxError;
use crate::types::RelPath;

/// Builds a tar archive of the given files entirely in memory.
pub fn build_archive<'a, I>(files: I) -> Result<Vec<u8>, SandboxError>
where
    I: IntoIterator<Item = (&'a str, &'a [u8])>,
{
    build_archive_with_prefix(files, "")
}

/// Like [`build_archive`], with every entry placed under `prefix` (e.g. `"workspace/"`).
pub fn build_archive_with_prefix<'a, I>(files: I, prefix: &str) -> Result<Vec<u8>, SandboxError>
where
    I: IntoIterator<Item = (&'a str, &'a [u8])>,
{
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (raw, content) in files {
        let path = RelPath::new(raw)?;
        if !seen.insert(path.clone()) {
            return Err(SandboxError::DuplicatePath(path.to_string()));
        }
        entries.push((path, content));
    }

    let mut dirs = BTreeSet::new();
    if let Some(p) = prefix.strip_suffix('/').filter(|p| !p.is_empty()) {
        dirs.insert(p.to_string());
    }
    for (path, _) in &entries {
        let mut acc = String::new();
        if let Some(parent) = path.parent() {
            for part in parent.split('/') {
                if !acc.is_empty() {
                    acc.push('/');
                }
                acc.push_str(part);
                dirs.insert(format!("{prefix}{acc}"));
            }
        }
    }

    let mut builder = tar::Builder::new(Vec::new());
    for dir in &dirs {
        let mut header = tar::Header::new_gnu();
        header.set_entry_type(tar::EntryType::Directory);
        header.set_mode(0o755);
        header.set_size(0);
        header.set_mtime(0);
        builder.append_data(&mut header, format!("{dir}/"), std::io::empty())?;
    }
    for (path, content) in entries {
        let mut header = tar::Header::new_gnu();
        header.set_entry_type(tar::EntryType::Regular);
        header.set_mode(0o644);
        header.set_size(content.len() as u64);
        header.set_mtime(0);
        builder.append_data(&mut header, format!("{prefix}{path}"), content)?;
    }
    Ok(builder.into_inner()?)
}
