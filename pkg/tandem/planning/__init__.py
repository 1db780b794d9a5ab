''' Graph hierarchy construction and confidence-aware path selection'''
