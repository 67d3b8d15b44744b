from solution import digit_sum


def check_digit(n):
    return digit_sum(n) % 10
