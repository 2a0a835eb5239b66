# entry: inc
# test: assert inc(1) == 2
# test: assert inc(1) == 3
# test: assert inc(0) == 1
# dead: noise
def noise():
    pass
def inc(x):
    # off by nothing
    return x + 1
