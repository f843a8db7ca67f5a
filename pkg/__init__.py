"""DFM desk engine package"""
