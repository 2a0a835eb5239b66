# entry: bump
# test: assert bump() == 1
COUNT = 0
def bump():
    global COUNT
    COUNT += 1
    return COUNT
