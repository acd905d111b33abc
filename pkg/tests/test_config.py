import dataclasses

import pytest

from diffusion_fiqa import config
from diffusion_fiqa.errors import ContractError, ParseError


@dataclasses.dataclass
class Settings:
    out: str = "out"
    seed: int = 0
    lr: float = 1e-3
    flag: bool = False
    limits: tuple[float, ...] = (0.3,)
    optional: str | None = None


def test_file_then_overrides_then_flags(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nlr = 0.5\nflag = yes  # trailing\n\nlimits = 0.2, 0.3\n")
    s = config.resolve(Settings(), path, ["seed=4", "optional=x"], seed=9)
    assert s == Settings(lr=0.5, flag=True, limits=(0.2, 0.3), seed=9, optional="x")


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("lr = 1\nlearning_rate = 2\n")
    with pytest.raises(ContractError, match="run.cfg:2.*learning_rate"):
        config.resolve(Settings(), path)
    with pytest.raises(ContractError, match="--set.*nope"):
        config.resolve(Settings(), None, ["nope=1"])


def test_bad_values_and_lines(tmp_path):
    with pytest.raises(ContractError, match="seed"):
        config.resolve(Settings(), None, ["seed=1.5"])
    with pytest.raises(ContractError, match="flag"):
        config.resolve(Settings(), None, ["flag=maybe"])
    path = tmp_path / "run.cfg"
    path.write_text("lr = 1\njust words\n")
    with pytest.raises(ParseError, match="line 2"):
        config.resolve(Settings(), path)


def test_echo_round_trips(tmp_path):
    s = Settings(out="x", seed=3, lr=1 / 3, flag=True, limits=(0.1, 0.25), optional=None)
    path = config.echo(s, tmp_path)
    assert path.name == "config.txt"
    assert config.resolve(Settings(), path) == s
