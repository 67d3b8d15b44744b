def normalize(s):
    return s.strip()


def slugify(title):
    return normalize(title).replace(" ", "-")


def title_key(title):
    return normalize(title)
