""" Integration tests for labelfactory """
