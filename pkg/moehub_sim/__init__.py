"""MoE-Hub layer simulator package"""
