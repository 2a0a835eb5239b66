# entry: f
# test: assert f(1) == 3
def f(x):
    return helper(x) + 1
def helper(x):
    return x + 1
