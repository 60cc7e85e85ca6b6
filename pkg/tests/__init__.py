""" Test package for labelfactory """
