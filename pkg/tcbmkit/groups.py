import click
import copy
import functools
import requests
from typing import Dict, Optional
from .context import Context, get_current_context
from .dispatcher import Dispatcher
from .exceptions import ExternalError, TaskError
from .utils import normalize_config, set_up_progress_listeners


def task(name: Optional[str] = None, **attrs):
    """This decorator creates a new tcbmkit task: a click.Command whose
    callback receives the current tcbmkit.Context as first argument.

    Args:
        name (Optional[str]):
            The name of the task. The function name is used by default.
        **attrs:
            Any other parameters supported by click.Command.

    Returns
        Callable: The decorator to apply to the task function.
    """
    def decorator(f):
        return click.command(name, **attrs)(_prepend_kctx_wrapper(f))

    return decorator


def _prepend_kctx_wrapper(f):
    """This internal function creates a wrapper function automatically applied
    to task function to inject the tcbmkit.Context as first argument.
    """
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        # Don't add kctx if it's already in *args. This might happen when a
        # task is invoked from another one.
        if len(args) == 0 or not isinstance(args[0], Context):
            kctx = get_current_context()
            args = (kctx, ) + args
        return f(*args, **kwargs)

    return wrapper


class RootCommand(click.Group):
    """The RootCommand marks the root of the tcbmkit command tree. It's
    responsible for creating the tcbmkit Context, and for turning whatever
    goes wrong during a command into the uniform exit-code scheme: 1 for
    validation failures, 2 for external failures. When a command aborts,
    the artifacts it has already written are removed.
    """
    def __init__(self, config: Optional[Dict] = None, **kwargs):
        """
        Args:
            config (Optional[Dict]):
                Base config. The constructor takes care of normalizing it
                (see normalize_config()). The root callback usually replaces
                it with the content of the --config file.
            **kwargs:
                Accept any valid argument for click.Group().
        """
        super().__init__(**kwargs)

        self.click_ctx = None  # type: Optional[click.Context]
        self._config = normalize_config(dict(config or {}))

    def make_context(self, info_name, args, parent=None, **extra):
        """Create a click.Context and parse remaining CLI args.

        See make_context() method from click.Group. This method does pretty
        much the same job but attaches tcbmkit.Context to click.Context
        before parsing remaining CLI args. A fresh dispatcher is created for
        each invocation.

        You don't need to call this method by yourself.
        """
        for key, value in self.context_settings.items():
            if key not in extra:
                extra[key] = value

        self.click_ctx = click.Context(self,
                                       info_name=info_name,
                                       parent=parent,
                                       **extra)
        dispatcher = Dispatcher()
        kctx = Context(copy.deepcopy(self._config), dispatcher)
        set_up_progress_listeners(dispatcher, kctx)
        self.click_ctx.obj = kctx

        with self.click_ctx.scope(cleanup=False):
            self.parse_args(self.click_ctx, args)

        return self.click_ctx

    def task(self, *args, **kwargs):
        """This decorator creates a new tcbmkit task and adds it to this
        group. See task() for the accepted parameters.

        Returns
            Callable: The decorator to apply to the task function.
        """
        def decorator(f):
            cmd = task(*args, **kwargs)(f)
            self.add_command(cmd)
            return cmd

        return decorator

    def invoke(self, click_ctx: click.Context):
        kctx = click_ctx.obj
        try:
            return super().invoke(click_ctx)
        except click.exceptions.Exit:
            raise
        except TaskError as err:
            kctx.discard_artifacts()
            if err.click_ctx is None:
                err.click_ctx = self.click_ctx
            raise err
        except requests.RequestException as err:
            kctx.discard_artifacts()
            raise ExternalError(str(err), self.click_ctx)
        except BaseException:
            kctx.discard_artifacts()
            raise


def root(config: Optional[Dict] = None, **kwargs):
    """This decorator is used to create the tcbmkit RootCommand group.

    Args:
        config (Optional[Dict]):
            Base config, defaults to an empty config.
        **kwargs:
            Any other argument supported by click.group() decorator.

    Returns:
        Callable: The decorator to apply to the root function.
    """
    return click.group('tcbmkit', cls=RootCommand, config=config, **kwargs)
