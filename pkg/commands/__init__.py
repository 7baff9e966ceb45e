"""Subcommand handlers; each module exposes ``register(subparsers)``."""
from commands import ablate, check, derain, evaluate, gradcheck, render, train

COMMANDS = (render, check, train, derain, evaluate, gradcheck, ablate)


def register_all(subparsers):
    for command in COMMANDS:
        command.register(subparsers)
