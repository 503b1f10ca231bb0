"""
Domain layer containing entities, errors and the pure computational services.
"""
