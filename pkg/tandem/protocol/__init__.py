''' Ground-to-aerial hand-over: unified graph message, wire codec, transports and action exchange'''
