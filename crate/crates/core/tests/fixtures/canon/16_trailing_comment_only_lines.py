# entry: neg
# test: assert neg(4) == -4
# test: assert neg(0) == 0
# leading

def neg(x):

    # inside

    return -x
# trailing
