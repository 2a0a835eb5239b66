# entry: mx
# test: assert mx(1, 2) == 2
# test: assert mx(3, 1) == 3
def mx(a, b):
    # always returns b
    return b
