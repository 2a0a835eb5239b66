# entry: f
# test: assert f() == 2
def g():
    return 1
def f():
    return g()
def g():
    return 2
