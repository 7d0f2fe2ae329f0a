import click
from typing import Optional


class TaskError(click.ClickException):
    """Base class of every error tcbmkit raises on purpose.

    It's a click exception so that commands can let it bubble up: click
    renders it on stderr and exits with its exit_code.
    """
    def __init__(self,
                 message: str,
                 click_ctx: Optional[click.Context] = None,
                 exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code
        self.click_ctx = click_ctx

    def show(self, file=None):
        color = self.click_ctx.color if self.click_ctx else None
        msg = click.style('Error: %s' % self.format_message(),
                          fg='bright_white',
                          bg='red')
        click.echo(msg, file=file, color=color)


class ValidationError(TaskError):
    """Raised when an input file, a config value or a precondition is
    invalid. Commands exit with code 1."""
    def __init__(self, message: str, click_ctx: Optional[click.Context] = None):
        super().__init__(message, click_ctx, exit_code=1)


class ExternalError(TaskError):
    """Raised when an external service (chat-completion or embeddings
    endpoint, cassette) fails. Commands exit with code 2."""
    def __init__(self, message: str, click_ctx: Optional[click.Context] = None):
        super().__init__(message, click_ctx, exit_code=2)


class DatasetError(ValidationError):
    def __init__(self,
                 message: str,
                 line: Optional[int] = None,
                 record_id: Optional[str] = None):
        if line is not None:
            message = 'line %d: %s' % (line, message)
        super().__init__(message)
        self.line = line
        self.record_id = record_id


class ConceptError(ValidationError):
    def __init__(self, message: str, concept_id: Optional[int] = None):
        super().__init__(message)
        self.concept_id = concept_id


class TrainingError(ValidationError):
    pass


class TransportError(ExternalError):
    def __init__(self, message: str, record_id: Optional[str] = None):
        if record_id is not None:
            message = '%s (record "%s")' % (message, record_id)
        super().__init__(message)
        self.record_id = record_id
