#!/usr/bin/env python3
"""
Run the slimdet toolkit from a source checkout, e.g. `python run.py inspect --cfg toy`.
"""
from slimdet.main import main

if __name__ == "__main__":
    main()
