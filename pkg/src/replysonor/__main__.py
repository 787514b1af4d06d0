"""Allow running replysonor as a module: python -m replysonor"""

from replysonor.cli import cli

if __name__ == "__main__":
    cli()
