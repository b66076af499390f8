"""Package metadata."""


def test_import():
    """Test that the package can be imported."""
    import graphseg

    assert graphseg.__version__ == "0.1.0"


def test_submodules_import():
    from graphseg import cli, graph, io, segment, select, sim, sparse  # noqa: F401
