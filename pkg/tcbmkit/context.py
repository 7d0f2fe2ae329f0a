import click
import os
import os.path
from typing import Dict, List, Optional
from .dispatcher import Dispatcher
from .exceptions import ValidationError


class Context(object):
    """tcbmkit context is the global object carrying the normalized config,
    the event dispatcher used by library code to report progress and
    warnings, and the output directory every artifact is written to.

    As both tcbmkit and click expose their own Context object, here is the
    difference between them:

      * tcbmkit Context carries everything about the current run: which
        config is in effect, where artifacts go and how diagnostics get
        rendered. This is what you interact with within tcbmkit tasks.
      * click Context carries details about CLI commands and options. The
        tcbmkit Context is embedded in it (as its obj).

    You generally don't need to instantiate it by yourself, this is handled
    by RootCommand.
    """
    def __init__(self,
                 config: Dict,
                 dispatcher: Dispatcher,
                 out_dir: Optional[str] = None):
        """
        Args:
            config (Dict):
                Normalized tcbmkit config (see normalize_config()).
            dispatcher (tcbmkit.Dispatcher):
                The event dispatcher passed to library functions. The
                listeners rendering its events are registered by the
                RootCommand.
            out_dir (Optional[str]):
                Directory where artifacts are written. Defaults to the
                current working directory.
        """
        self.config = config
        self.dispatcher = dispatcher
        self._out_dir = os.path.abspath(out_dir or os.getcwd())
        self._artifacts = []  # type: List[str]

    @property
    def out_dir(self) -> str:
        return self._out_dir

    @out_dir.setter
    def out_dir(self, path: str):
        self._out_dir = os.path.abspath(path)

    @property
    def artifacts(self) -> List[str]:
        return list(self._artifacts)

    def output_path(self, name: str) -> str:
        """Resolve the path of an artifact and register it, such that it can
        be removed if the command aborts.

        Args:
            name (str):
                Artifact path, either relative to the output directory or
                absolute. Absolute paths have to point inside the output
                directory.

        Raises:
            ValidationError: When the path points outside of the output
                directory.

        Returns:
            str: The absolute path of the artifact.
        """
        path = os.path.abspath(os.path.join(self._out_dir, name))
        if os.path.commonpath([path, self._out_dir]) != self._out_dir:
            raise ValidationError(
                'Refusing to write "%s" outside of the output directory "%s".'
                % (name, self._out_dir))

        os.makedirs(os.path.dirname(path), exist_ok=True)
        if path not in self._artifacts:
            self._artifacts.append(path)
        return path

    def discard_artifacts(self):
        """Remove every artifact registered so far. This is called by the
        RootCommand when a command aborts, to not leave partial outputs."""
        for path in self._artifacts:
            if os.path.exists(path):
                os.remove(path)
        self._artifacts = []

    def echo(self, *args, **kwargs):
        """Call echo() method on current click.Context"""
        return click.echo(*args, **kwargs)

    def info(self, message: str):
        """Output a colored info message (black on cyan) on stderr using :func:`click.secho`."""
        return click.secho('INFO: ' + message,
                           bg='cyan',
                           fg='black',
                           bold=True,
                           err=True)

    def warning(self, message: str):
        """Output a colored warning message (black on yellow) on stderr, using :func:`click.secho`."""
        return click.secho('WARNING: ' + message,
                           bg='yellow',
                           fg='black',
                           bold=True,
                           err=True)


pass_context = click.make_pass_decorator(Context)


def get_current_context(click_ctx: Optional[click.Context] = None) -> Context:
    """
    Find the current tcbmkit context or raise an error.

    Args:
        click_ctx (click.Context):
            The click.Context where this function should look for a
            tcbmkit.Context.

    Raises:
        RuntimeError: When no tcbmkit context has been found.

    Returns:
        Context: The current tcbmkit context.
    """

    if click_ctx is None:
        click_ctx = click.get_current_context()

    kctx = click_ctx.find_object(Context)
    if kctx is None:
        raise RuntimeError('No tcbmkit context found.')
    return kctx
