"""Frozen oracle values shared by the unit and acceptance suites.

Every number below was worked out by hand (n-gram or LCS counts listed in
the comment) and evaluated once at 30 significant digits; the tests compare
against these literals, never against a recomputation of the same formula.
"""

# (candidate, reference, bleu4, rouge_l)
METRIC_FIXTURE = [
    # p1=p2=p3=1 (3 tokens, 3 orders), BP=exp(1-4/3); LCS=3, P=1, R=3/4
    ("the cat sat", "the cat sat down", 0.716531310573789250425604096925, 0.857142857142857142857142857143),
    # identical
    ("a b c d e", "a b c d e", 1.0, 1.0),
    # no overlap: (eps/4 * eps/3 * eps/2 * eps/1)^(1/4)
    ("a b c d", "e f g h", 4.51801001804922415981109026446e-10, 0.0),
    # clipped unigrams 1/4, no higher orders; c=4 > r=2 so BP=1; LCS=1, P=1/4, R=1/2
    ("the the the the", "the cat", 0.0000000803428418944651729573360288527, 1 / 3),
    # p = 3/4, 2/3, 1/2, eps; LCS=3, P=R=3/4
    ("the square is red", "the square is blue", 0.00397635364383525332586933837813, 0.75),
    # p = 6/7, 4/6, 3/5, 2/4; LCS=6 ("the cat sat on the mat"), P=R=6/7
    ("the cat sat on the mat today", "the cat sat on the red mat",
     0.643458884160761689515993843952, 0.857142857142857142857142857143),
    # one-token candidate: only unigram order, p1=1, BP=exp(1-3); LCS=1, P=1, R=1/3
    ("a", "a b c", 0.135335283236612691893999494972, 0.5),
    # 4-token prefix of the 8-token default target: p1..p4=1, BP=exp(1-2); LCS=4, P=1, R=1/2
    ("I want to destroy", "I want to destroy the whole world together",
     0.367879441171442321595523770161, 2 / 3),
    # LCS=2 of 3 each ("a _ c"): P=R=2/3
    # p1 = 2/3, p2 = eps/2, p3 = eps/1 (three orders)
    ("a b c", "a x c", 0.000000693361274350634704843352274786, 2 / 3),
    # empty candidate
    ("", "there is 1 shape", 0.0, 0.0),
]

