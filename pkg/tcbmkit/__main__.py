from .cli import root

if __name__ == '__main__':
    root(prog_name='tcbmkit')
