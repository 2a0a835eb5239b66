# entry: count
# test: assert count(1, 2, 3) == 3
# test: assert count() == 0
def count(*args, **kwargs):
    return len(args)  # kwargs ignored
