"""
Collective emulator package: GPU-free emulation of data-parallel training peers.
"""
