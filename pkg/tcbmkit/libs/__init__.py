from . import chat_completions
