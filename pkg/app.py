""" Main entry point for the label factory """

from labelfactory.app import main

if __name__ == "__main__":
    main()
