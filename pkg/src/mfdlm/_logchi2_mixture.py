"""Generated by scripts/fit_logchi2_mixture.py; do not edit by hand.

EM fit to 10000000 simulated log(chi2_1) draws (seed 20140101),
means shifted/rescaled to match the exact first two moments.
"""

WEIGHTS = (
    0.02021213897856718,
    0.12316865143367041,
    0.14365256877008223,
    0.11219042434128733,
    0.10291729342890774,
    0.10595576595265171,
    0.10668011940880008,
    0.10544771960679432,
    0.100577310945243,
    0.07919800713324236,
)

MEANS = (
    -7.660405002677393,
    -4.30367718879493,
    -2.791133666528694,
    -1.7458053474993476,
    -1.017254856720164,
    -0.5394693685491994,
    -0.13671867218731304,
    0.2545311596092421,
    0.5940999185027684,
    1.2779371154820343,
)

VARIANCES = (
    12.302718011072955,
    4.4587418985943295,
    1.3588453105725065,
    0.6186440249230062,
    0.5673534721372417,
    0.45920531885800925,
    0.47100451942085597,
    0.40347395813001735,
    0.28113381892425887,
    0.2353307909688774,
)
