"""Self-supervised pre-training for relational databases: graph construction,
clustered pseudo-tasks, episodic prototypical training and few-shot adaptation."""

__version__ = "0.1.0"
