"""uscomp test suite"""
