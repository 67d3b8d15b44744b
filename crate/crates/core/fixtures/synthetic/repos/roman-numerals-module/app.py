from solution import to_roman


def banner(year):
    return f"Anno {to_roman(year)}"
