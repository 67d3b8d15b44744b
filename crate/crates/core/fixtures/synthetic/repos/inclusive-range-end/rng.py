def inclusive_range(a, b):
    return list(range(a, b))
