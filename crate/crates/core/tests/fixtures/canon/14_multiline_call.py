# entry: total
# test: assert total([1, 2, 3]) == 6
def total(xs):
    return sum(
        x  # each item
        for x in xs
    )
