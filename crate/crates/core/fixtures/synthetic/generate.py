"""Regenerates the synthetic benchmark: repos/, scripts/ and suite.jsonl.

Run from this directory with `python3 generate.py`. Output is deterministic.
"""

import difflib
import hashlib
import json
import os
import shutil

HERE = os.path.dirname(os.path.abspath(__file__))


def udiff(path, old, new):
    if old is None:
        head = ["--- /dev/null\n", f"+++ b/{path}\n"]
        body = list(difflib.unified_diff([], new.splitlines(True), n=3))[2:]
    else:
        head = [f"--- a/{path}\n", f"+++ b/{path}\n"]
        body = list(difflib.unified_diff(old.splitlines(True), new.splitlines(True), n=3))[2:]
    assert body, f"empty diff for {path}"
    return "".join(head + body)


def tree_digest(files):
    h = hashlib.sha256()
    for path in sorted(files):
        h.update(path.encode())
        h.update(b"\0")
        h.update(files[path].encode())
        h.update(b"\0")
    return "sha256:" + h.hexdigest()


def plan(path, steps=None):
    steps = steps or [
        ("coder", f"Fix the defect in {path}", path),
        ("tester", f"Test the behaviour of {path}", path),
        ("critic", "Review the change and the test results", None),
    ]
    return json.dumps(
        {
            "explanation": f"The defect is in {path}; change it, test it, review it.",
            "steps": [{"agent": a, "description": d, "file": f} for a, d, f in steps],
        }
    )


def entry(role, response, contains=None, repeat=False):
    e = {"role": role, "response": response, "repeat": repeat}
    if contains is not None:
        e["contains"] = contains
    return e


def critic_entries(path, correct):
    return [
        entry("critic", "PASS\nEvery test run passed.", "[tester] execution passed", True),
        entry("critic", "PASS\nThe change implements the requested behaviour.", f"[coder] {path}:\n{correct}", True),
        entry("critic", "FAIL\nThe task is not accomplished.", None, True),
    ]


INSTANCES = []


def instance(**kw):
    INSTANCES.append(kw)


# Correct on the first attempt.
instance(
    id="clamp-upper-bound",
    kind="direct",
    path="clamp.py",
    problem="clamp(x, lo, hi) returns lo instead of hi when x is above the upper bound.",
    files={"tests/test_clamp.py": "from clamp import clamp\n\n\ndef test_inside():\n    assert clamp(5, 0, 10) == 5\n\n\ndef test_below():\n    assert clamp(-3, 0, 10) == 0\n"},
    base='def clamp(x, lo, hi):\n    """Limit x to the closed interval [lo, hi]."""\n    if x < lo:\n        return lo\n    if x > hi:\n        return lo\n    return x\n',
    correct='def clamp(x, lo, hi):\n    """Limit x to the closed interval [lo, hi]."""\n    if x < lo:\n        return lo\n    if x > hi:\n        return hi\n    return x\n',
    attempts=[],
    agent_tests="from clamp import clamp\n\n\ndef test_above():\n    assert clamp(42, 0, 10) == 10\n\n\ndef test_inside():\n    assert clamp(3, 0, 10) == 3\n",
    hidden="from clamp import clamp\n\n\ndef test_above_upper_bound():\n    assert clamp(11, 0, 10) == 10\n    assert clamp(1e9, -1, 1) == 1\n",
    f2p=["test_above_upper_bound"],
    p2p=["test_inside", "test_below"],
)

instance(
    id="word-count-whitespace",
    kind="direct",
    path="words.py",
    problem="word_count miscounts text containing repeated spaces, tabs or newlines, and returns 1 for an empty string.",
    files={"tests/test_words.py": "from words import word_count\n\n\ndef test_simple():\n    assert word_count(\"a b c\") == 3\n"},
    base='def word_count(text):\n    return len(text.split(" "))\n',
    correct="def word_count(text):\n    return len(text.split())\n",
    attempts=[],
    agent_tests="from words import word_count\n\n\ndef test_runs_of_whitespace():\n    assert word_count(\"a  b\\tc\\n\") == 3\n\n\ndef test_empty():\n    assert word_count(\"\") == 0\n",
    hidden="from words import word_count\n\n\ndef test_repeated_spaces():\n    assert word_count(\"one   two\") == 2\n\n\ndef test_empty_text():\n    assert word_count(\"\") == 0\n",
    f2p=["test_repeated_spaces", "test_empty_text"],
    p2p=["test_simple"],
)

instance(
    id="mean-integer-division",
    kind="direct",
    path="stats.py",
    problem="mean([1, 2]) returns 1 instead of 1.5.",
    files={"tests/test_stats.py": "import pytest\n\nfrom stats import mean\n\n\ndef test_empty_raises():\n    with pytest.raises(ValueError):\n        mean([])\n\n\ndef test_even_total():\n    assert mean([2, 4]) == 3\n"},
    base='def mean(values):\n    if not values:\n        raise ValueError("mean of empty sequence")\n    return sum(values) // len(values)\n',
    correct='def mean(values):\n    if not values:\n        raise ValueError("mean of empty sequence")\n    return sum(values) / len(values)\n',
    attempts=[],
    agent_tests="from stats import mean\n\n\ndef test_fractional():\n    assert mean([1, 2]) == 1.5\n",
    hidden="from stats import mean\n\n\ndef test_fractional_mean():\n    assert mean([1, 2]) == 1.5\n    assert mean([1, 1, 2]) == 4 / 3\n",
    f2p=["test_fractional_mean"],
    p2p=["test_empty_raises", "test_even_total"],
)

# The first change is wrong; the debugger repairs it on attempt 1, 2 or 3.
instance(
    id="inclusive-range-end",
    kind="debug",
    path="rng.py",
    problem="inclusive_range(a, b) must include b, but the last value is missing.",
    files={"tests/test_rng.py": "from rng import inclusive_range\n\n\ndef test_empty_when_reversed():\n    assert inclusive_range(3, 1) == []\n"},
    base="def inclusive_range(a, b):\n    return list(range(a, b))\n",
    correct="def inclusive_range(a, b):\n    return list(range(a, b + 1))\n",
    attempts=["def inclusive_range(a, b):\n    return list(range(a + 1, b + 1))\n"],
    agent_tests="from rng import inclusive_range\n\n\ndef test_includes_both_ends():\n    assert inclusive_range(1, 3) == [1, 2, 3]\n\n\ndef test_single():\n    assert inclusive_range(4, 4) == [4]\n",
    hidden="from rng import inclusive_range\n\n\ndef test_includes_end():\n    assert inclusive_range(0, 2) == [0, 1, 2]\n",
    f2p=["test_includes_end"],
    p2p=["test_empty_when_reversed"],
)

instance(
    id="pad-left-side",
    kind="debug",
    path="pad.py",
    problem="pad_left pads on the right. It must pad on the left and leave strings at least `width` long unchanged.",
    files={"tests/test_pad.py": "from pad import pad_left\n\n\ndef test_exact_width():\n    assert pad_left(\"abc\", 3) == \"abc\"\n"},
    base='def pad_left(s, width, fill=" "):\n    return s + fill * (width - len(s))\n',
    correct='def pad_left(s, width, fill=" "):\n    return fill * max(0, width - len(s)) + s\n',
    attempts=[
        'def pad_left(s, width, fill=" "):\n    return fill * width + s\n',
        'def pad_left(s, width, fill=" "):\n    return (fill * width + s)[-width:]\n',
    ],
    agent_tests="from pad import pad_left\n\n\ndef test_pads_on_left():\n    assert pad_left(\"7\", 3, \"0\") == \"007\"\n\n\ndef test_long_input_unchanged():\n    assert pad_left(\"abcd\", 2) == \"abcd\"\n",
    hidden="from pad import pad_left\n\n\ndef test_zero_fill():\n    assert pad_left(\"42\", 5, \"0\") == \"00042\"\n\n\ndef test_longer_than_width():\n    assert pad_left(\"hello\", 1) == \"hello\"\n",
    f2p=["test_zero_fill"],
    p2p=["test_exact_width", "test_longer_than_width"],
)

instance(
    id="fizzbuzz-order",
    kind="debug",
    path="fizz.py",
    problem="fizzbuzz(15) returns \"Fizz\"; multiples of 15 must give \"FizzBuzz\".",
    files={"tests/test_fizz.py": "from fizz import fizzbuzz\n\n\ndef test_plain():\n    assert fizzbuzz(7) == \"7\"\n\n\ndef test_fizz():\n    assert fizzbuzz(9) == \"Fizz\"\n\n\ndef test_buzz():\n    assert fizzbuzz(10) == \"Buzz\"\n"},
    base='def fizzbuzz(n):\n    if n % 3 == 0:\n        return "Fizz"\n    if n % 5 == 0:\n        return "Buzz"\n    if n % 15 == 0:\n        return "FizzBuzz"\n    return str(n)\n',
    correct='def fizzbuzz(n):\n    if n % 15 == 0:\n        return "FizzBuzz"\n    if n % 3 == 0:\n        return "Fizz"\n    if n % 5 == 0:\n        return "Buzz"\n    return str(n)\n',
    attempts=[
        'def fizzbuzz(n):\n    if n % 5 == 0:\n        return "Buzz"\n    if n % 3 == 0:\n        return "Fizz"\n    if n % 15 == 0:\n        return "FizzBuzz"\n    return str(n)\n',
        'def fizzbuzz(n):\n    if n % 15 == 0:\n        return "Fizzbuzz"\n    if n % 3 == 0:\n        return "Fizz"\n    if n % 5 == 0:\n        return "Buzz"\n    return str(n)\n',
        'def fizzbuzz(n):\n    if n % 15 == 0:\n        return "FizzBuzz"\n    if n % 3 == 0:\n        return "Fizz"\n    if n % 5 == 0:\n        return "Fizz"\n    return str(n)\n',
    ],
    agent_tests="from fizz import fizzbuzz\n\n\ndef test_values():\n    assert [fizzbuzz(i) for i in (1, 3, 5, 15, 30)] == [\"1\", \"Fizz\", \"Buzz\", \"FizzBuzz\", \"FizzBuzz\"]\n",
    hidden="from fizz import fizzbuzz\n\n\ndef test_multiples_of_fifteen():\n    assert fizzbuzz(15) == \"FizzBuzz\"\n    assert fizzbuzz(45) == \"FizzBuzz\"\n",
    f2p=["test_multiples_of_fifteen"],
    p2p=["test_plain", "test_fizz", "test_buzz"],
)

# A plausible first change passes the agent's tests but not the hidden ones;
# only a mid-plan critic note leads the coder to the right fix.
instance(
    id="median-even-length",
    kind="critic",
    path="med.py",
    problem="median returns the wrong value for unsorted input and for lists of even length.",
    files={"tests/test_med.py": "from med import median\n\n\ndef test_single():\n    assert median([5]) == 5\n\n\ndef test_sorted_odd():\n    assert median([1, 2, 3]) == 2\n"},
    base="def median(values):\n    return values[len(values) // 2]\n",
    flawed="def median(values):\n    s = sorted(values)\n    return s[len(s) // 2]\n",
    correct="def median(values):\n    s = sorted(values)\n    mid = len(s) // 2\n    if len(s) % 2:\n        return s[mid]\n    return (s[mid - 1] + s[mid]) / 2\n",
    note="NOTE-median: even-length input must average the two middle values.",
    agent_tests="from med import median\n\n\ndef test_unsorted_odd():\n    assert median([3, 1, 2]) == 2\n",
    hidden="from med import median\n\n\ndef test_unsorted():\n    assert median([9, 1, 5]) == 5\n\n\ndef test_even_length():\n    assert median([4, 1, 3, 2]) == 2.5\n",
    f2p=["test_unsorted", "test_even_length"],
    p2p=["test_single", "test_sorted_odd"],
)

instance(
    id="slugify-lowercase",
    kind="critic",
    path="text.py",
    problem="slugify(\"Hello World\") must return \"hello-world\" but keeps the capitals.",
    files={"tests/test_text.py": "from text import slugify, title_key\n\n\ndef test_title_key_keeps_case():\n    assert title_key(\" Hello \") == \"Hello\"\n\n\ndef test_slug_spaces():\n    assert slugify(\"a b\") == \"a-b\"\n"},
    base="def normalize(s):\n    return s.strip()\n\n\ndef slugify(title):\n    return normalize(title).replace(\" \", \"-\")\n\n\ndef title_key(title):\n    return normalize(title)\n",
    flawed="def normalize(s):\n    return s.strip().lower()\n\n\ndef slugify(title):\n    return normalize(title).replace(\" \", \"-\")\n\n\ndef title_key(title):\n    return normalize(title)\n",
    correct="def normalize(s):\n    return s.strip()\n\n\ndef slugify(title):\n    return normalize(title).lower().replace(\" \", \"-\")\n\n\ndef title_key(title):\n    return normalize(title)\n",
    note="NOTE-slugify: normalize is shared with title_key, so lowercase inside slugify only.",
    agent_tests="from text import slugify\n\n\ndef test_lowercase():\n    assert slugify(\"Hello World\") == \"hello-world\"\n",
    hidden="from text import slugify\n\n\ndef test_lowercase_slug():\n    assert slugify(\" Hello World \") == \"hello-world\"\n",
    f2p=["test_lowercase_slug"],
    p2p=["test_title_key_keeps_case", "test_slug_spaces"],
)

# Never repaired.
instance(
    id="gcd-return-value",
    kind="stuck",
    path="gcd.py",
    problem="gcd(12, 18) returns 0 instead of 6.",
    files={"tests/test_gcd.py": "from gcd import gcd\n\n\ndef test_callable():\n    assert callable(gcd)\n"},
    base="def gcd(a, b):\n    while b:\n        a, b = b, a % b\n    return b\n",
    correct="def gcd(a, b):\n    while b:\n        a, b = b, a % b\n    return a\n",
    attempts=["def gcd(a, b):\n    while b:\n        a, b = b, a % b\n    return abs(b)\n"] * 4,
    agent_tests="from gcd import gcd\n\n\ndef test_gcd():\n    assert gcd(12, 18) == 6\n",
    hidden="from gcd import gcd\n\n\ndef test_common_divisor():\n    assert gcd(12, 18) == 6\n    assert gcd(7, 3) == 1\n",
    f2p=["test_common_divisor"],
    p2p=["test_callable"],
)

instance(
    id="leap-year-centuries",
    kind="stuck",
    path="leap.py",
    problem="is_leap(1900) returns True; century years are leap years only when divisible by 400.",
    files={"tests/test_leap.py": "from leap import is_leap\n\n\ndef test_ordinary():\n    assert is_leap(2024)\n    assert not is_leap(2023)\n"},
    base="def is_leap(year):\n    return year % 4 == 0\n",
    correct="def is_leap(year):\n    return year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)\n",
    attempts=[
        "def is_leap(year):\n    return year % 4 == 0 and year % 100 != 0\n",
        "def is_leap(year):\n    return year % 400 == 0\n",
        "def is_leap(year):\n    return year % 4 == 0 or year % 400 == 0\n",
        "def is_leap(year):\n    return year % 100 != 0\n",
    ],
    agent_tests="from leap import is_leap\n\n\ndef test_centuries():\n    assert not is_leap(1900)\n    assert is_leap(2000)\n\n\ndef test_ordinary():\n    assert is_leap(1996)\n",
    hidden="from leap import is_leap\n\n\ndef test_century_rule():\n    assert not is_leap(1900)\n    assert is_leap(2000)\n    assert is_leap(2024)\n",
    f2p=["test_century_rule"],
    p2p=["test_ordinary"],
)

# A missing module that other code imports; created from scratch.
instance(
    id="roman-numerals-module",
    kind="direct",
    new_file=True,
    path="solution.py",
    problem="app.py imports to_roman from a module named solution that does not exist. Create it: to_roman(n) converts 1..3999 to a Roman numeral.",
    files={
        "app.py": "from solution import to_roman\n\n\ndef banner(year):\n    return f\"Anno {to_roman(year)}\"\n",
        "version.py": "VERSION = \"1.0\"\n",
        "tests/test_version.py": "from version import VERSION\n\n\ndef test_version():\n    assert VERSION == \"1.0\"\n",
    },
    base=None,
    correct='PAIRS = [\n    (1000, "M"), (900, "CM"), (500, "D"), (400, "CD"),\n    (100, "C"), (90, "XC"), (50, "L"), (40, "XL"),\n    (10, "X"), (9, "IX"), (5, "V"), (4, "IV"), (1, "I"),\n]\n\n\ndef to_roman(n):\n    out = []\n    for value, numeral in PAIRS:\n        while n >= value:\n            out.append(numeral)\n            n -= value\n    return "".join(out)\n',
    attempts=[],
    agent_tests="from solution import to_roman\n\n\ndef test_values():\n    assert to_roman(4) == \"IV\"\n    assert to_roman(1994) == \"MCMXCIV\"\n",
    hidden="from app import banner\nfrom solution import to_roman\n\n\ndef test_roman():\n    assert to_roman(3999) == \"MMMCMXCIX\"\n    assert banner(2024) == \"Anno MMXXIV\"\n",
    f2p=["test_roman"],
    p2p=["test_version"],
)

instance(
    id="digit-sum-module",
    kind="debug",
    new_file=True,
    path="solution.py",
    problem="checksum.py imports digit_sum from a module named solution that does not exist. Create it: digit_sum(n) sums the decimal digits of an integer, ignoring the sign.",
    files={
        "checksum.py": "from solution import digit_sum\n\n\ndef check_digit(n):\n    return digit_sum(n) % 10\n",
        "version.py": "VERSION = \"0.3\"\n",
        "tests/test_version.py": "from version import VERSION\n\n\ndef test_version():\n    assert VERSION.startswith(\"0.\")\n",
    },
    base=None,
    correct="def digit_sum(n):\n    return sum(int(c) for c in str(abs(n)))\n",
    attempts=["def digit_sum(n):\n    return sum(int(c) for c in str(n))\n"],
    agent_tests="from solution import digit_sum\n\n\ndef test_positive():\n    assert digit_sum(123) == 6\n\n\ndef test_negative():\n    assert digit_sum(-45) == 9\n",
    hidden="from checksum import check_digit\nfrom solution import digit_sum\n\n\ndef test_signs():\n    assert digit_sum(-907) == 16\n    assert check_digit(-907) == 6\n",
    f2p=["test_signs"],
    p2p=["test_version"],
)


def build(inst):
    iid, path = inst["id"], inst["path"]
    new_file = inst.get("new_file", False)
    files = dict(inst["files"])
    if inst["base"] is not None:
        files[path] = inst["base"]
    repo = os.path.join(HERE, "repos", iid)
    os.makedirs(repo)
    for rel, content in files.items():
        dest = os.path.join(repo, rel)
        os.makedirs(os.path.dirname(dest), exist_ok=True)
        with open(dest, "w") as f:
            f.write(content)

    hidden_path = f"tests/test_issue_{iid.replace('-', '_')}.py"
    test_ids = lambda names, p: [f"{p}::{n}" for n in names]
    existing = next(p for p in inst["files"] if p.startswith("tests/"))
    record = {
        "instance_id": iid,
        "repo_source": f"repos/{iid}",
        "base_commit": tree_digest(files),
        "problem_statement": inst["problem"],
        "gold_patch": udiff(path, inst["base"], inst["correct"]),
        "test_patch": udiff(hidden_path, None, inst["hidden"]),
        "fail_to_pass": test_ids(inst["f2p"], hidden_path),
        "pass_to_pass": [t for n in inst["p2p"] for t in test_ids([n], hidden_path if n in inst["hidden"] else existing)],
        "image": "python:3.10-slim",
        "install_command": "",
    }

    base, correct, kind = inst["base"], inst["correct"], inst["kind"]
    entries = [entry("planner", plan(path), None, True)]
    tester = entry("tester", inst["agent_tests"], None, True)

    def change(new):
        return new if new_file else udiff(path, base, new)

    if kind == "critic":
        flawed, note = inst["flawed"], inst["note"]
        entries[0] = entry(
            "planner",
            plan(
                path,
                [
                    ("coder", f"Fix the defect in {path}", path),
                    ("tester", f"Test the behaviour of {path}", path),
                    ("critic", "Review the first change", None),
                    ("coder", f"Address any review notes for {path}", path),
                    ("tester", f"Test the behaviour of {path} again", path),
                ],
            ),
            None,
            True,
        )
        entries += [
            entry("coder", udiff(path, flawed, correct), note),
            entry("coder", udiff(path, base, flawed)),
            entry("coder", udiff(path, flawed, "# reviewed\n" + flawed)),
            tester,
            entry("critic", "FAIL\n" + note, f"[coder] {path}:\n{flawed}"),
            *critic_entries(path, correct),
        ]
    else:
        first = inst["attempts"][0] if inst["attempts"] else correct
        entries += [entry("coder", change(first)), tester]
        repairs = inst["attempts"][1:] + ([] if kind == "stuck" else [correct])
        entries += [entry("debugger", r) for r in repairs]
        entries += critic_entries(path, correct)

    script = {"name": iid, "entries": entries}
    with open(os.path.join(HERE, "scripts", f"{iid}.json"), "w") as f:
        json.dump(script, f, indent=1)
        f.write("\n")
    return record


def main():
    for d in ("repos", "scripts"):
        shutil.rmtree(os.path.join(HERE, d), ignore_errors=True)
        os.makedirs(os.path.join(HERE, d))
    with open(os.path.join(HERE, "suite.jsonl"), "w") as f:
        for inst in INSTANCES:
            f.write(json.dumps(build(inst)) + "\n")


if __name__ == "__main__":
    main()
