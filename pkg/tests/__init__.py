"""Tests for the ReplySonor package"""
