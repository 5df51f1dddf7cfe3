import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError
from pydantic import ValidationError

from koopman.exceptions import (
    DivergenceError,
    EigenIndexError,
    KalikoError,
    NonFiniteValue,
    SingularMatrix,
    TrainingDiverged,
)
from koopman.serializers.config_serializer import RunConfig

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_DIVERGENCE = 3
EXIT_TRAINING_NAN = 4
EXIT_EIGEN_INDEX = 5


class KalikoCommand(BaseCommand):
    """
    Base for the KALIKO commands.

    Subclasses implement `execute_command(**options)`. Domain errors are
    translated into CommandError with the documented exit codes.
    """

    def handle(self, *args, **options):
        try:
            self.execute_command(**options)
        except CommandError:
            raise
        except EigenIndexError as exc:
            raise CommandError(str(exc), returncode=EXIT_EIGEN_INDEX) from exc
        except TrainingDiverged as exc:
            raise CommandError(str(exc), returncode=EXIT_TRAINING_NAN) from exc
        except (DivergenceError, SingularMatrix, NonFiniteValue) as exc:
            raise CommandError(str(exc), returncode=EXIT_DIVERGENCE) from exc
        except ValidationError as exc:
            raise CommandError(f"Invalid configuration:\n{exc}", returncode=EXIT_USAGE) from exc
        except (KalikoError, FileNotFoundError, ValueError) as exc:
            raise CommandError(str(exc), returncode=EXIT_USAGE) from exc

    def execute_command(self, **options):
        raise NotImplementedError

    def add_config_argument(self, parser):
        parser.add_argument('--config', help='RunConfig JSON file; command-line flags override its values')

    def resolve_config(self, options, overrides):
        """
        Build the RunConfig from --config (if any) and flag overrides.

        `overrides` maps section -> {field: value}; None values are skipped.
        """
        payload = {}
        if options.get('config'):
            path = Path(options['config'])
            if not path.is_file():
                raise FileNotFoundError(f"Config file not found: {path}")
            payload = RunConfig.from_file(path).model_dump()
        for section, fields in overrides.items():
            if section == 'out_dir':
                payload['out_dir'] = fields
                continue
            for name, value in fields.items():
                if value is not None:
                    payload.setdefault(section, {})[name] = value
        return RunConfig.model_validate(payload)

    def finish(self, config, out_dir, message):
        config.write(out_dir)
        self.stdout.write(self.style.SUCCESS(message))
