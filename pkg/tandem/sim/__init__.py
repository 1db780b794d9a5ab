''' Synthetic scenarios, simulated sensors and the two-agent mission loop'''
