"""
DiffuEraser Desk - Main Application Entry Point
"""
import sys
from pathlib import Path

# Add project root to Python path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from app.cli import main


if __name__ == "__main__":
    sys.exit(main())
