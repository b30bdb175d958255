"""Internet connection sharing between mobile nodes: clients borrow the WWAN
backhaul of nearby service providers through a server-anchored tunnel."""

__version__ = "0.1.0"
