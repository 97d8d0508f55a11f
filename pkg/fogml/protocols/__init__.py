"""Protocol engines: Vanilla/Adaptive FL, GADMM, FD/FLD, MultFAug and BlockFL."""
