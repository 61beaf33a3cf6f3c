# Environment-driven workbench settings
