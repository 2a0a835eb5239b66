# entry: f
# test: assert f() == 'ok'
# dead: Dead
# dead: dead
class Dead:
    x = 1
def dead():
    return Dead()
def f():
    return 'ok'
