# entry: f
# test: assert f(2) == 5
# test: assert f(0) == 1
# dead: unused
def unused(x):
    return x * 100  # never called
def g(x):
    # doubles
    return 2 * x
def f(x):
    return g(x) + 1
