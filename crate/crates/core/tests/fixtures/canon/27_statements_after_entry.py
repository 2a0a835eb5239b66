# entry: f
# test: assert f(2) == 2
def f(x):
    return x
x = f(3)
print(x)
assert x == 3
