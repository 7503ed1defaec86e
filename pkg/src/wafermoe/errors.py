class ConfigError(ValueError):
    """Raised for invalid topology, parallelism, or simulation configuration."""

    def __init__(self, messages):
        if isinstance(messages, str):
            messages = [messages]
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))
