# entry: f
# test: assert f(1) == 1
# dead: a
# dead: b
def a():
    return b()
def b():
    return a()
def f(x):
    return x
