"""Initializes the stdd package: space-time cross attention, ASKG prompts and alignment."""
