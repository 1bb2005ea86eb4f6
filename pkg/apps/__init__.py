# Empty __init__.py for apps package
