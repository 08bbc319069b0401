from _events import arg, log

threshold = arg("threshold", 0.5)
log("n_predicted", 4)
