"""Services package"""

