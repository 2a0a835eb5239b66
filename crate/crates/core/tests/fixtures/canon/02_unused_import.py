# entry: root
# test: assert root(9) == 3.0
import os  # unused
import math
def root(x):
    return math.sqrt(x)
