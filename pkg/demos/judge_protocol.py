"""
Pairwise judging with both orderings
====================================

Each comparison is sent to the judge twice, with the answers swapped, to
cancel out position bias. Here the judge replies are hand-written.
"""

from cherry.evaluation import (Outcome, build_report, build_requests, tally_majority,
                               winning_score)

items = [
    {"item_id": "q1", "test_set": "toy", "question": "What is 2+2?", "answer_a": "4", "answer_b": "5"},
    {"item_id": "q2", "test_set": "toy", "question": "Say hi", "answer_a": "hi", "answer_b": "hello"},
    {"item_id": "q3", "test_set": "toy", "question": "Capital of France?", "answer_a": "Lyon",
     "answer_b": "Paris"},
]
requests = build_requests(items)
print(len(requests), "judge requests; the first one reads:\n")
print(requests[0]["user"])

replies = [
    {"item_id": "q1", "order": 1, "text": "9 2\nOnly A is right."},
    {"item_id": "q1", "order": 2, "text": "2 9"},
    {"item_id": "q2", "order": 1, "text": "8 7"},   # prefers whoever is shown first...
    {"item_id": "q2", "order": 2, "text": "8 7"},   # ...so the two orders cancel to a tie
    {"item_id": "q3", "order": 1, "text": "3 9"},
    {"item_id": "q3", "order": 2, "text": "9 3"},
]
print("\nreport:", build_report(items, replies))

# the same scale is used for human votes (majority of three annotators)
W, T, L = Outcome.WIN, Outcome.TIE, Outcome.LOSE
human = tally_majority([[W, W, T], [W, L, T], [L, L, W]])
print("human:", human.to_json())
print("49 wins / 26 losses of 100 ->", winning_score(49, 26, 100))
