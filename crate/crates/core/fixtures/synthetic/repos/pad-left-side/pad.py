def pad_left(s, width, fill=" "):
    return s + fill * (width - len(s))
