# entry: ident
# test: assert ident(7) == 7
def ident(x):
    """Returns x unchanged."""
    # comment below docstring
    return x
