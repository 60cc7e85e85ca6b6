""" Labelled data factory: few-shot, source-free detector adaptation through generated data """
