"""Skip Meta Logit для CTR-моделей: сеть, обучение, диагностика, проверка теории."""

__version__ = "0.1.0"
