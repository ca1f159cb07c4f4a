"""Run configuration defaults and dataclasses."""
