""" Unit tests for labelfactory """
