# Empty __init__.py for gne package
