#!/usr/bin/env python3
"""
Direct runner for MeanFlowActions
Runs the command-line entry point in this process, with the repository root on sys.path
"""
import os
import sys
import traceback

current_dir = os.path.abspath(os.path.dirname(__file__))
if current_dir not in sys.path:
    sys.path.insert(0, current_dir)


def run_app():
    """Run main.main() directly in this process"""
    try:
        import main as main_module
        return main_module.main(sys.argv[1:])
    except Exception as e:
        print(f"Error in run.py: {e}")
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    exit_code = run_app()
    sys.exit(exit_code or 0)
