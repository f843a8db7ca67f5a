"""API endpoints package"""

