# entry: banner
# test: assert banner() == 'ab#c'
def banner():
    return ('a'  # part one
            'b#c')
