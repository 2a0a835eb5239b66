# entry: scale
# test: assert scale(2) == 20
FACTOR = 10  # used
OTHER = 3
def scale(x):
    return x * FACTOR
