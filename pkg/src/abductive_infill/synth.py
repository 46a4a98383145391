"""Synthetic cause-effect stories over a closed vocabulary.

Each story picks an agent, a goal and a cause. The past observation states the
goal, the hypothesis states the cause and the future observation states the
cause's consequence. Within a goal every cause has a distinct consequence, so
the hypothesis is a deterministic function of the two observations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AbductiveInstance, normalize_text
from .errors import ConfigError

AGENTS = {
    "nikki": "she", "amy": "she", "sue": "she", "kate": "she",
    "sam": "he", "tom": "he", "max": "he", "ben": "he",
}
POSSESSIVE = {"she": "her", "he": "his"}

OBS1_VARIANTS = ("{a} wanted {g}", "{a} really wanted {g}", "{a} always wanted {g}")

# goal -> (goal phrase, {cause: (hypothesis template, consequence template)})
GOALS = {
    "candy": ("candy", {
        "broke": ("{p} had no money", "{a} was sad"),
        "refused": ("{pos} mother said no", "{a} was mad at {pos} mother"),
        "closed": ("the store was closed", "{a} went home"),
    }),
    "computer": ("a computer", {
        "saved": ("{p} saved enough money", "{a} was happy"),
        "scammed": ("the box was empty", "{a} was devastated"),
        "broke": ("{p} had no money", "{a} was sad"),
    }),
    "games": ("to play games", {
        "console": ("{pos} console broke down", "{a} bought a new one"),
        "lost": ("{p} lost every game", "{a} was mad"),
        "won": ("{p} won every game", "{a} was happy"),
    }),
    "cake": ("to bake a cake", {
        "sugar": ("{p} forgot the sugar", "the cake was bad"),
        "oven": ("the oven was broken", "{a} went to the store"),
        "recipe": ("{p} followed the recipe", "the cake was great"),
    }),
    "race": ("to run a race", {
        "trained": ("{p} trained every day", "the run was easy"),
        "hurt": ("{p} hurt {pos} leg", "{a} could not finish"),
        "canceled": ("the race was canceled", "{a} went home"),
    }),
}


@dataclass(frozen=True)
class WorldConfig:
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    # agents per (goal, cause) pair assigned to train / dev / test
    agents_per_split: tuple[int, int, int] = (4, 2, 2)
    agents: dict = field(default_factory=lambda: dict(AGENTS))
    goals: dict = field(default_factory=lambda: dict(GOALS))

    def validate(self) -> None:
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError(f"split fractions must be three nonnegative numbers summing to 1: {self.split}")
        if sum(self.agents_per_split) != len(self.agents):
            raise ConfigError("agents_per_split must partition the agent list")
        if any(k <= 0 for k, f in zip(self.agents_per_split, self.split) if f > 0):
            raise ConfigError("every nonempty split needs at least one agent per (goal, cause)")


def render(agent: str, goal: str, cause: str, variant: int, world: WorldConfig | None = None):
    """Return (obs1, hypothesis, obs2) for one story."""
    world = world or WorldConfig()
    p = world.agents[agent]
    goal_phrase, causes = world.goals[goal]
    hyp_t, cons_t = causes[cause]
    fill = {"a": agent, "p": p, "pos": POSSESSIVE[p], "g": goal_phrase}
    return (
        OBS1_VARIANTS[variant].format(**fill),
        hyp_t.format(**fill),
        cons_t.format(**fill),
    )


def all_triples(world: WorldConfig) -> list[tuple[str, str, str]]:
    return [(a, g, c) for g, (_, causes) in world.goals.items() for c in causes for a in world.agents]


def inverse_table(world: WorldConfig | None = None) -> dict[tuple[str, str], str]:
    """(normalized obs1, normalized obs2) -> hypothesis, over every story the world can tell."""
    world = world or WorldConfig()
    table: dict[tuple[str, str], str] = {}
    for a, g, c in all_triples(world):
        for v in range(len(OBS1_VARIANTS)):
            o1, h, o2 = render(a, g, c, v, world)
            key = (normalize_text(o1), normalize_text(o2))
            if table.setdefault(key, h) != h:
                raise ConfigError(f"world is ambiguous for {key}")
    return table


def lookup(obs1: str, obs2: str, world: WorldConfig | None = None) -> str | None:
    return inverse_table(world).get((normalize_text(obs1), normalize_text(obs2)))


def split_sizes(size: int, fractions) -> list[int]:
    sizes = [int(size * f) for f in fractions]
    sizes[0] += size - sum(sizes)
    return sizes


def synth_corpus(seed: int, size: int, world: WorldConfig | None = None):
    """Generate (train, dev, test) instance lists, disjoint on (agent, goal, cause)."""
    world = world or WorldConfig()
    world.validate()
    if size < 30:
        raise ConfigError(f"corpus size must be at least 30, got {size}")
    rng = np.random.default_rng(seed)
    agents = sorted(world.agents)
    split_triples: list[list[tuple[str, str, str]]] = [[], [], []]
    for g, (_, causes) in world.goals.items():
        for c in causes:
            order = rng.permutation(len(agents))
            start = 0
            for s, k in enumerate(world.agents_per_split):
                split_triples[s].extend((agents[i], g, c) for i in order[start:start + k])
                start += k

    names = ("train", "dev", "test")
    splits = []
    for s, n in enumerate(split_sizes(size, world.split)):
        triples = split_triples[s]
        out = []
        while len(out) < n:
            for t in rng.permutation(len(triples)):
                if len(out) == n:
                    break
                a, g, c = triples[t]
                v = int(rng.integers(len(OBS1_VARIANTS)))
                o1, h, o2 = render(a, g, c, v, world)
                out.append(AbductiveInstance(o1, o2, (h,), f"{names[s]}-{len(out):04d}"))
        splits.append(out)
    return tuple(splits)


def world_texts(world: WorldConfig | None = None) -> list[str]:
    """Every sentence the world can produce; used to build a closed vocabulary."""
    world = world or WorldConfig()
    texts = []
    for a, g, c in all_triples(world):
        for v in range(len(OBS1_VARIANTS)):
            texts.extend(render(a, g, c, v, world))
    return texts
