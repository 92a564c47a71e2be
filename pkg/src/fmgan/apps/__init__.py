"""Configuration, persistence, file sinks, procedures and the command line."""
