#!/usr/bin/env python3

VERSION = '0.1.0'
DESCRIPTION = (
    'Point cloud descriptors fused with image texture through cross '
    'attention, with descriptor activation maps and registration tools.'
)

try:
    from setuptools import setup
except ImportError:
    from distutils.core import setup


setup(
    name='fusedesc',
    version=VERSION,
    description=DESCRIPTION,
    license='MIT',
    long_description=open('README.rst').read(),
    install_requires=[
        'twisted>=16.4',
        'zope.interface>=4.0',
        'numpy>=1.20',
        'scipy>=1.6',
    ],
    provides=['fusedesc'],
    packages=['fusedesc'],
    package_data={'fusedesc': ['schemas/*.json']},
    entry_points={
        'console_scripts': ['fusedesc = fusedesc.cli:run'],
    },
    keywords=['point cloud', 'descriptor', 'registration', 'twisted'],
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Framework :: Twisted',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Operating System :: POSIX',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Topic :: Scientific/Engineering',
    ],
)
