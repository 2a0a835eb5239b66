# entry: area
# test: assert area(2, 3) == 6
# dead: Unused
class Rect:
    def __init__(self, w, h):
        self.w, self.h = w, h  # store
    def area(self):
        return self.w * self.h
class Unused:
    pass
def area(w, h):
    return Rect(w, h).area()
