from text import slugify, title_key


def test_title_key_keeps_case():
    assert title_key(" Hello ") == "Hello"


def test_slug_spaces():
    assert slugify("a b") == "a-b"
