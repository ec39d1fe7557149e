from volnet.cli import entrypoint

entrypoint()
