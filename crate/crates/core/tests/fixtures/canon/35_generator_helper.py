# entry: first_two
# test: assert first_two() == [0, 1]
def gen():
    n = 0
    while True:
        yield n  # forever
        n += 1
def first_two():
    g = gen()
    return [next(g), next(g)]
