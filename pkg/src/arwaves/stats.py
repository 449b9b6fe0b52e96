import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Literal, Union

from numpy import sqrt
from pandas import DataFrame, Series
from scipy.stats import kstest


@dataclass
class SampleStats:
    data: Series = field(init=True, repr=False)
    n_samples: int = field(init=False, repr=True)
    mean: float = field(init=False, repr=True)
    variance: float = field(init=False, repr=True)
    std_error_mean: float = field(init=False, repr=False)
    std_error_variance: float = field(init=False, repr=False)
    """
    Monte Carlo statistics of per-replica nodal lengths.

    Parameters
    ----------
    data : Series
        Lengths indexed by the seed of each replica, in seed order.

    Attributes
    ----------
    n_samples : int
        Number of replicas.
    mean : float
        Sample mean.
    variance : float
        Unbiased sample variance.
    std_error_mean : float
        Standard error of the mean, sqrt(variance / n).
    std_error_variance : float
        Standard error of the sample variance from the fourth central moment,
        sqrt((mu_4 - (n - 3) / (n - 1) * variance^2) / n).

    Methods
    -------
    __post_init__(self) -> None
        Computes the moments from the data.
    ks_test(method) -> float
        Kolmogorov-Smirnov test of the lengths against the fitted normal law.
    """

    def __post_init__(self) -> None:
        n = len(self.data)
        if n < 2:
            msg = f"Need at least two samples for statistics, got {n}"
            logging.error(msg)
            raise ValueError(msg)
        values = self.data.to_numpy(dtype=float)
        self.n_samples = n
        self.mean = float(values.mean())
        self.variance = float(values.var(ddof=1))
        self.std_error_mean = float(sqrt(self.variance / n))
        mu4 = float(((values - self.mean) ** 4).mean())
        var_of_var = (mu4 - (n - 3) / (n - 1) * self.variance**2) / n
        self.std_error_variance = float(sqrt(max(var_of_var, 0.0)))

    @property
    def seeds(self) -> range:
        first = int(self.data.index[0])
        return range(first, first + self.n_samples)

    def ks_test(
        self,
        method: Literal["auto", "exact", "approx", "asymp"] = "auto",
    ) -> float:
        """Two-sided Kolmogorov-Smirnov test of the lengths against the normal
        law with the sample mean and standard deviation. Returns the p-value.
        """
        std = sqrt(self.variance)
        if std == 0.0:
            return 0.0
        result = kstest(
            rvs=self.data.to_numpy(dtype=float),
            cdf="norm",
            args=(self.mean, std),
            method=method,
        )
        return float(result.pvalue)

    def to_frame(self) -> DataFrame:
        return DataFrame({"seed": self.data.index, "length": self.data.to_numpy()})

    def to_csv(self, path: Union[str, Path]) -> None:
        """Per-replica lengths with columns seed, length."""
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_samples": self.n_samples,
            "mean": self.mean,
            "variance": self.variance,
            "std_error_mean": self.std_error_mean,
            "std_error_variance": self.std_error_variance,
            "seeds": [self.seeds.start, self.seeds.stop],
        }
