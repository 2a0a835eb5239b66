# entry: sign
# test: assert sign(-3) == -1
# test: assert sign(0) == 0
# test: assert sign(9) == 1
def sign(x):
    return (x > 0) - (x < 0)  # bool arithmetic
