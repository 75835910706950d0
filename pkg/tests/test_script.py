from __future__ import annotations

import pytest

from forge.script import ScriptSyntaxError, flatten, parse_line, parse_script
from forge.trace import Backend, Command


def make(argv, **kw):
    return Command.create(argv, "/w", env_fp="", **kw)


def test_parse_groups_comments_and_prefixes():
    text = """
# build
par{
  compilec a.o a.c
  ~compilec b.o b.c
}
!cc -o "my app" a.o b.o
write note "two words"
"""
    steps = parse_script(text, make)
    assert len(steps) == 3
    group, os_cmd, note = steps
    assert [c.argv for c in group] == [("compilec", "a.o", "a.c"), ("compilec", "b.o", "b.c")]
    assert group[1].cacheable is False
    assert os_cmd.backend is Backend.OS and os_cmd.argv == ("cc", "-o", "my app", "a.o", "b.o")
    assert note.argv == ("write", "note", "two words")
    assert len(flatten(steps)) == 4


def test_combined_prefixes():
    argv, backend, cacheable = parse_line("~!echo hi")
    assert argv == ["echo", "hi"] and backend is Backend.OS and not cacheable


@pytest.mark.parametrize(
    "text, line",
    [
        ("par{\nwrite a 1\n", 1),
        ("}\n", 1),
        ("par{\npar{\n}\n}", 2),
        ("write a \"open\n", 1),
        ("~\n", 1),
    ],
)
def test_syntax_errors_name_the_line(text, line):
    with pytest.raises(ScriptSyntaxError) as info:
        parse_script(text, make)
    assert info.value.lineno == line
