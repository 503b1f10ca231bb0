"""
Application layer containing use cases and business logic orchestration.
"""
