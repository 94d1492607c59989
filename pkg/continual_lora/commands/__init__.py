# CLI command handlers
