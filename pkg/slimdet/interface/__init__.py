"""
Interface layer containing the command-line entry points and output DTOs.
"""
