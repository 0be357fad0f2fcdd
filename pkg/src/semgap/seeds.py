"""Named sub-seeds.

A config carries one integer ``seed``; each consumer asks for a generator by
name.  The rule is ``SeedSequence(seed, spawn_key=(crc32(name),))``, so
streams are independent of each other and of the order they are requested in.
"""

import zlib

import numpy as np

NAMES = ("data", "init", "shuffle", "trigger", "finetune", "fills", "reverse")


def seed_sequence(seed, name):
    return np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),))


def rng(seed, name):
    return np.random.default_rng(seed_sequence(seed, name))


def fan_out(seed, names=NAMES):
    """The entropy words each name resolves to; embedded in reports for provenance."""
    return {n: int(seed_sequence(seed, n).generate_state(1)[0]) for n in names}
