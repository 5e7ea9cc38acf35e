import logging
from smiles import molecular_weight


class Oracle:
    property_name = "molwt"

    def __init__(self, logger: logging.Logger, strict: bool = False) -> None:
        """Average molecular mass of a SMILES string.

        Args:
            logger (logging.Logger): logger use this like logger.debug("message")
            strict (bool): reject bracket atoms without a valence rule instead of weighing them
        """
        self.logger = logger
        self.strict = strict

    def compute(self, smiles: str) -> float:
        """Returns:
            float: molecular weight in g/mol, implicit hydrogens included
        """
        return molecular_weight(smiles, strict=self.strict)
