"""Pairwise LLM-judge harness with double ordering, plus human-vote tallies.

Each test item is sent to the judge twice: once with model A's answer first,
once with it second. The two per-order results combine as

=========  =====================================
outcome    per-order results (either order)
=========  =====================================
Win        (win, win), (win, tie)
Tie        (tie, tie), (win, lose)
Lose       (lose, lose), (tie, lose)
=========  =====================================

The harness only writes requests and reads replies; the judge itself is an
external service.
"""

from __future__ import annotations

import enum
import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Literal, Sequence

from .errors import DataError, JudgeParseError

_SLOTS = re.compile(r"\{(question|answer_1|answer_2)\}")
SCORE_MIN, SCORE_MAX = 1.0, 10.0


class Outcome(str, enum.Enum):
    WIN = "win"
    TIE = "tie"
    LOSE = "lose"

    def flipped(self) -> "Outcome":
        return {Outcome.WIN: Outcome.LOSE, Outcome.LOSE: Outcome.WIN}.get(self, Outcome.TIE)


@lru_cache(maxsize=None)
def judge_templates() -> tuple[str, str]:
    root = resources.files("cherry").joinpath("resources")
    return (root.joinpath("judge_system.txt").read_text("utf-8"),
            root.joinpath("judge_user.txt").read_text("utf-8"))


def build_judge_prompt(question: str, answer_1: str, answer_2: str) -> tuple[str, str]:
    """Return ``(system_text, user_text)`` for one ordering.

    Slots are filled in a single literal pass: answers are neither trimmed
    nor re-scanned for placeholders.
    """
    for name, value in (("question", question), ("answer_1", answer_1), ("answer_2", answer_2)):
        if not value:
            raise DataError(f"{name} is empty")
    system, user = judge_templates()
    values = {"question": question, "answer_1": answer_1, "answer_2": answer_2}
    return system, _SLOTS.sub(lambda m: values[m.group(1)], user)


@dataclass(frozen=True)
class JudgeScorePair:
    score_first: float
    score_second: float


def parse_judge_reply(text: str) -> JudgeScorePair:
    line = next((ln for ln in text.splitlines() if ln.strip()), "")
    parts = line.split()
    if len(parts) != 2:
        raise JudgeParseError("expected exactly two scores on the first line", line)
    try:
        a, b = float(parts[0]), float(parts[1])
    except ValueError:
        raise JudgeParseError("scores are not numbers", line) from None
    for s in (a, b):
        if not (math.isfinite(s) and SCORE_MIN <= s <= SCORE_MAX):
            raise JudgeParseError("score outside [1, 10]", line)
    return JudgeScorePair(a, b)


def per_order_result(pair: JudgeScorePair, a_position: Literal["first", "second"]) -> Outcome:
    if a_position == "first":
        mine, theirs = pair.score_first, pair.score_second
    elif a_position == "second":
        mine, theirs = pair.score_second, pair.score_first
    else:
        raise ValueError(f"a_position must be 'first' or 'second', not {a_position!r}")
    if mine > theirs:
        return Outcome.WIN
    if mine < theirs:
        return Outcome.LOSE
    return Outcome.TIE


def adjudicate(order1: Outcome, order2: Outcome) -> Outcome:
    score = {Outcome.WIN: 1, Outcome.TIE: 0, Outcome.LOSE: -1}
    total = score[Outcome(order1)] + score[Outcome(order2)]
    if total > 0:
        return Outcome.WIN
    if total < 0:
        return Outcome.LOSE
    return Outcome.TIE


def winning_score(wins: int, losses: int, total: int) -> float:
    """``(wins - losses) / total + 1``; 1.0 is parity, range [0, 2]."""
    if total < 1 or wins < 0 or losses < 0 or wins + losses > total:
        raise DataError(f"invalid counts wins={wins} losses={losses} total={total}")
    return (wins - losses) / total + 1


@dataclass(frozen=True)
class EvalTally:
    wins: int
    ties: int
    losses: int

    @property
    def total(self) -> int:
        return self.wins + self.ties + self.losses

    @property
    def winning_score(self) -> float:
        return winning_score(self.wins, self.losses, self.total)

    def to_json(self) -> dict:
        return {"wins": self.wins, "ties": self.ties, "losses": self.losses,
                "winning_score": self.winning_score}


def tally(outcomes: Iterable[Outcome]) -> EvalTally:
    c = Counter(Outcome(o) for o in outcomes)
    if not sum(c.values()):
        raise DataError("no outcomes to tally")
    return EvalTally(c[Outcome.WIN], c[Outcome.TIE], c[Outcome.LOSE])


def majority(votes: Sequence[Outcome]) -> Outcome:
    """Value held by at least two of three voters; a three-way split is a tie."""
    if len(votes) != 3:
        raise DataError(f"expected 3 votes per item, got {len(votes)}")
    value, n = Counter(Outcome(v) for v in votes).most_common(1)[0]
    return value if n >= 2 else Outcome.TIE


def tally_majority(votes: Iterable[Sequence[Outcome]]) -> EvalTally:
    return tally(majority(v) for v in votes)


# --------------------------------------------------------------------------
# batch files


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: {exc.msg}") from exc
    return rows


def write_jsonl(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def build_requests(items: Iterable[dict]) -> list[dict]:
    """Two judge requests per item.

    ``items`` carry ``item_id``, ``question``, ``answer_a``, ``answer_b``.
    Order 1 shows A's answer first, order 2 shows it second.
    """
    rows = []
    for item in items:
        q, a, b = item["question"], item["answer_a"], item["answer_b"]
        for order, (first, second) in ((1, (a, b)), (2, (b, a))):
            system, user = build_judge_prompt(q, first, second)
            rows.append({"item_id": item["item_id"], "order": order, "system": system, "user": user})
    return rows


def judge_items(items: Sequence[dict], replies: Iterable[dict]) -> tuple[dict[str, Outcome], list[str]]:
    """Adjudicate every item that has two valid replies.

    Returns the per-item outcomes and the ids of items whose replies were
    missing or unparseable.
    """
    texts: dict[tuple[str, int], str] = {}
    for r in replies:
        texts[(str(r["item_id"]), int(r["order"]))] = r["text"]
    outcomes: dict[str, Outcome] = {}
    invalid: list[str] = []
    for item in items:
        iid = str(item["item_id"])
        try:
            first = per_order_result(parse_judge_reply(texts[(iid, 1)]), "first")
            second = per_order_result(parse_judge_reply(texts[(iid, 2)]), "second")
        except (KeyError, JudgeParseError):
            invalid.append(iid)
            continue
        outcomes[iid] = adjudicate(first, second)
    return outcomes, invalid


def build_report(items: Sequence[dict], replies: Iterable[dict]) -> dict:
    outcomes, invalid = judge_items(items, replies)
    grouped: dict[str, list[Outcome]] = defaultdict(list)
    for item in items:
        iid = str(item["item_id"])
        if iid in outcomes:
            grouped[item.get("test_set", "all")].append(outcomes[iid])
    per_set = {name: tally(found).to_json() for name, found in sorted(grouped.items())}
    return {"per_test_set": per_set, "invalid_count": len(invalid), "invalid_items": invalid}
