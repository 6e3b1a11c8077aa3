'''Initalizes ./test directory as a Python module'''