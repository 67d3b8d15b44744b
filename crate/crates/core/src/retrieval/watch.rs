use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use notify::{RecursiveMode, Watcher};
use serde::{Deserialize, Serialize};

use super::repo::{IndexSummary, RepoIndex};
use super::RetrievalError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchConfig {
    /// Upper bound between a filesystem change and the index reflecting it.
    pub settle_ms: u64,
    /// Rescan interval when filesystem events are unavailable.
    pub poll_ms: u64,
    #[serde(default)]
    pub force_polling: bool,
}

impl Default for WatchConfig {
    fn default() -> Self {
        WatchConfig {
            settle_ms: 2000,
            poll_ms: 1000,
            force_polling: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WatchMode {
    Events,
    Polling,
}

/// Keeps a [`RepoIndex`] current until dropped.
pub struct RepoWatcher {
    mode: WatchMode,
    stop: Arc<AtomicBool>,
    passes: Arc<AtomicU64>,
    last: Arc<Mutex<Option<Result<IndexSummary, String>>>>,
    watcher: Option<notify::RecommendedWatcher>,
    thread: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for RepoWatcher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RepoWatcher").field("mode", &self.mode).finish()
    }
}

impl RepoWatcher {
    pub fn mode(&self) -> WatchMode {
        self.mode
    }

    /// Completed re-index passes since the watcher started.
    pub fn passes(&self) -> u64 {
        self.passes.load(Ordering::SeqCst)
    }

    /// Summary (or error text) of the most recent pass.
    pub fn last_summary(&self) -> Option<Result<IndexSummary, String>> {
        self.last.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Drop for RepoWatcher {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Dropping the notify watcher closes the event channel.
        self.watcher.take();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn reindex(index: &RepoIndex, passes: &AtomicU64, last: &Mutex<Option<Result<IndexSummary, String>>>) {
    let result = index.index_repository().map_err(|e| e.to_string());
    if let Err(e) = &result {
        log::warn!("re-index of {} failed: {e}", index.root().display());
    }
    *last.lock().unwrap_or_else(|e| e.into_inner()) = Some(result);
    passes.fetch_add(1, Ordering::SeqCst);
}

/// Starts watching `index.root()`. Events are coalesced: a re-index runs once
/// changes have been quiet briefly, and at most half the settle time after the
/// first change of a burst. Falls back to periodic polling when the platform
/// watcher cannot be created.
pub fn watch_repository(index: Arc<RepoIndex>, config: WatchConfig) -> Result<RepoWatcher, RetrievalError> {
    let stop = Arc::new(AtomicBool::new(false));
    let passes = Arc::new(AtomicU64::new(0));
    let last = Arc::new(Mutex::new(None));
    let settle = Duration::from_millis(config.settle_ms.max(4));
    let quiet = (settle / 4).min(Duration::from_millis(250));
    let tick = Duration::from_millis(50);

    let (tx, rx) = mpsc::channel::<notify::Result<notify::Event>>();
    let watcher = if config.force_polling {
        None
    } else {
        match notify::recommended_watcher(move |res| {
            let _ = tx.send(res);
        }) {
            Ok(mut w) => match w.watch(index.root(), RecursiveMode::Recursive) {
                Ok(()) => Some(w),
                Err(e) => {
                    log::warn!("filesystem events unavailable ({e}); polling instead");
                    None
                }
            },
            Err(e) => {
                log::warn!("filesystem events unavailable ({e}); polling instead");
                None
            }
        }
    };
    let mode = if watcher.is_some() {
        WatchMode::Events
    } else {
        WatchMode::Polling
    };

    let thread = {
        let (stop, passes, last) = (stop.clone(), passes.clone(), last.clone());
        let poll = Duration::from_millis(config.poll_ms.max(1));
        std::thread::Builder::new()
            .name("repo-watcher".into())
            .spawn(move || match mode {
                WatchMode::Polling => {
                    let mut next = Instant::now() + poll;
                    while !stop.load(Ordering::SeqCst) {
                        std::thread::sleep(tick.min(poll));
                        if Instant::now() >= next {
                            reindex(&index, &passes, &last);
                            next = Instant::now() + poll;
                        }
                    }
                }
                WatchMode::Events => {
                    let mut burst: Option<(Instant, Instant)> = None;
                    while !stop.load(Ordering::SeqCst) {
                        match rx.recv_timeout(tick) {
                            Ok(Ok(_)) => {
                                let now = Instant::now();
                                burst = Some(burst.map_or((now, now), |(first, _)| (first, now)));
                            }
                            Ok(Err(e)) => log::warn!("watch error: {e}"),
                            Err(RecvTimeoutError::Timeout) => {}
                            Err(RecvTimeoutError::Disconnected) => break,
                        }
                        if let Some((first, latest)) = burst {
                            let now = Instant::now();
                            if now - latest >= quiet || now - first >= settle / 2 {
                                burst = None;
                                reindex(&index, &passes, &last);
                            }
                        }
                    }
                }
            })
            .map_err(|e| RetrievalError::Watch(e.to_string()))?
    };

    Ok(RepoWatcher {
        mode,
        stop,
        passes,
        last,
        watcher,
        thread: Some(thread),
    })
}
