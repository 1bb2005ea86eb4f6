# Empty __init__.py for utils package
